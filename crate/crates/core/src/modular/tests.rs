use super::*;
use rand::Rng;
use crate::nn::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_shape() -> ModelShape {
    ModelShape {
        input_dim: 6,
        front: vec![5],
        module_layers: vec![
            ModuleLayerShape {
                out_dim: 5,
                hidden: 8,
                n_modules: 4,
            };
            2
        ],
        num_classes: 3,
        shrink_fractions: vec![0.25, 0.5],
        include_residual: true,
        selector_embed: vec![4],
        k: 2,
        noise_scale: 1.0,
    }
}

fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Single-module layer with identity-like bodies so outputs are easy to predict.
fn constant_layer(values: &[f64]) -> ModuleLayer {
    let modules = values
        .iter()
        .enumerate()
        .map(|(i, &v)| Module {
            layer: 0,
            index: i,
            kind: ModuleKind::Shrunk { width_fraction: 1.0 },
            body: Some(ModuleBody {
                hidden: DenseLayer::from_parts(Tensor::zeros(&[1, 1]), Tensor::vector(vec![1.0]), Activation::Relu)
                    .unwrap(),
                out: DenseLayer::from_parts(Tensor::zeros(&[1, 1]), Tensor::vector(vec![v]), Activation::Identity)
                    .unwrap(),
            }),
        })
        .collect();
    ModuleLayer {
        index: 0,
        in_dim: 1,
        out_dim: 1,
        block_hidden: 1,
        n_total: values.len(),
        modules,
    }
}

#[test]
fn gated_sum_reference_value() {
    // Modules output constants 1, 2, 3, 4; gates (0.6, 0.1, 0.1, 0.2), top-2 {0, 3}.
    let layer = constant_layer(&[1.0, 2.0, 3.0, 4.0]);
    let gates = Tensor::new(vec![1, 4], vec![0.6, 0.1, 0.1, 0.2]).unwrap();
    let y = layer.forward(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &gates, &[vec![0, 3]]).unwrap();
    assert!((y.item() - (0.6 * 1.0 + 0.2 * 4.0)).abs() < 1e-15);
    let only = layer.forward(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &gates, &[vec![0]]).unwrap();
    assert!((only.item() - 0.6).abs() < 1e-15);
}

#[test]
fn residual_module_passes_input_through() {
    let mut layer = constant_layer(&[5.0]);
    layer.modules.push(Module {
        layer: 0,
        index: 1,
        kind: ModuleKind::Residual,
        body: None,
    });
    layer.n_total = 2;
    let gates = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
    let y = layer.forward(&Tensor::new(vec![1, 1], vec![2.0]).unwrap(), &gates, &[vec![1]]).unwrap();
    assert!((y.item() - 1.4).abs() < 1e-15);
    assert_eq!(layer.modules[1].param_count(), 0);
    assert_eq!(layer.modules[1].cost(1).comm_bytes, 0);
}

#[test]
fn modularize_rejects_single_module_layer() {
    let mut shape = small_shape();
    shape.module_layers[1].n_modules = 1;
    let err = modularize(&shape, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let mut shape = small_shape();
    shape.k = 5;
    assert!(modularize(&shape, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn design_space_of_four_layers_of_sixteen() {
    let mut shape = ModelShape::default();
    shape.module_layers = vec![shape.module_layers[0].clone(); 4];
    let pair = modularize(&shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(pair.model.design_space_log2(), 64);
}

#[test]
fn shrunk_widths_follow_fractions() {
    let pair = modularize(&ModelShape::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let layer = &pair.model.layers[0];
    assert_eq!(layer.modules.len(), 16);
    let widths: Vec<usize> = layer
        .modules
        .iter()
        .map(|m| m.body.as_ref().map_or(0, |b| b.hidden.out_dim()))
        .collect();
    assert_eq!(&widths[..4], &[8, 16, 8, 16]);
    assert_eq!(widths[15], 0);
    // d·h' + h'·d per sample, times three for training.
    assert_eq!(layer.modules[0].cost(32).compute_macs, 3 * (32 * 8 + 8 * 32));
    assert_eq!(layer.modules[0].cost(32).comm_bytes, 8 * (32 * 8 + 8 + 8 * 32 + 32));
}

#[test]
fn full_spec_materializes_the_cloud_model() {
    let pair = modularize(&small_shape(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let full = SubModelSpec::full(&pair.layer_widths());
    assert_eq!(pair.materialize(&full).unwrap(), pair);
    assert_eq!(pair.spec(), full);
    assert_eq!(pair.cost_of(&full).unwrap(), pair.total_cost());
}

#[test]
fn materialize_rejects_unknown_modules() {
    let pair = modularize(&small_shape(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sub = pair.materialize(&SubModelSpec::new(vec![vec![0, 1], vec![2]])).unwrap();
    assert!(matches!(
        sub.materialize(&SubModelSpec::new(vec![vec![3], vec![2]])),
        Err(Error::Spec(_))
    ));
    assert!(pair.materialize(&SubModelSpec::new(vec![vec![0]])).is_err());
}

#[test]
fn submodel_matches_cloud_when_routes_are_retained() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pair = modularize(&small_shape(), &mut rng).unwrap();
    let x = batch(&mut rng, 40, 6);
    let (cloud_logits, trace) = pair.forward(&x, Routing::Eval).unwrap();
    for r in 0..40 {
        let dec = trace.decision(r);
        let spec = SubModelSpec::new(dec.layers.iter().map(|l| l.active.clone()).collect());
        let sub = pair.materialize(&spec).unwrap();
        let row = x.select_rows(&[r]);
        let (sub_logits, sub_trace) = sub.forward(&row, Routing::Eval).unwrap();
        assert_eq!(sub_logits.data(), cloud_logits.row(r), "row {r}");
        assert_eq!(sub_trace.decision(0).layers[0].active, dec.layers[0].active);
    }
}

#[test]
fn submodel_renormalizes_missing_routes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pair = modularize(&small_shape(), &mut rng).unwrap();
    let x = batch(&mut rng, 1, 6);
    let (_, trace) = pair.forward(&x, Routing::Eval).unwrap();
    let dec = trace.decision(0);
    // Keep a single module per layer that the cloud did not pick first.
    let spec = SubModelSpec::new(
        dec.layers
            .iter()
            .map(|l| vec![(0..4).find(|i| !l.active.contains(i)).unwrap()])
            .collect(),
    );
    let sub = pair.materialize(&spec).unwrap();
    let (logits, st) = sub.forward(&x, Routing::Eval).unwrap();
    assert!(logits.is_finite());
    for (l, layer) in st.layers.iter().enumerate() {
        assert_eq!(layer.active[0], spec.layers[l]);
    }
}

#[test]
fn gradients_flow_through_gates_and_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pair = modularize(&small_shape(), &mut rng).unwrap();
    let x = batch(&mut rng, 5, 6);
    let labels = [0, 1, 2, 0, 1];
    for spec in [
        SubModelSpec::full(&pair.layer_widths()),
        SubModelSpec::new(vec![vec![0, 2, 3], vec![1, 2]]),
    ] {
        let sub = pair.materialize(&spec).unwrap();
        let loss_of = |p: &ModelPair| {
            let mut tape = Tape::new();
            let f = p.forward_tape(&mut tape, &x, &mut Routing::Eval).unwrap();
            let l = tape.cross_entropy(f.logits, &labels).unwrap();
            (tape.value(l).item(), f.trace)
        };
        let mut tape = Tape::new();
        let f = sub.forward_tape(&mut tape, &x, &mut Routing::Eval).unwrap();
        let loss = tape.cross_entropy(f.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (_, base_trace) = loss_of(&sub);
        assert!(grads.keys().any(|k| k.group == crate::nn::ParamGroup::Selector));
        let keys: Vec<_> = sub.params().into_iter().map(|(k, _)| k).collect();
        let mut checked = 0;
        for key in keys.iter().filter(|k| k.group == crate::nn::ParamGroup::Selector || k.name.ends_with('b')) {
            let len = sub.params().into_iter().find(|(k, _)| k == key).unwrap().1.len();
            for j in 0..len.min(4) {
                let eps = 1e-6;
                let bump = |d: f64| {
                    let mut p = sub.clone();
                    for (k, t) in p.params_mut() {
                        if &k == key {
                            t.data_mut()[j] += d;
                        }
                    }
                    loss_of(&p)
                };
                let (lp, tp) = bump(eps);
                let (lm, tm) = bump(-eps);
                // Skip coordinates where the perturbation flips a routing decision.
                if tp != base_trace && tp.decisions().iter().zip(base_trace.decisions()).any(|(a, b)| {
                    a.layers.iter().zip(&b.layers).any(|(x, y)| x.active != y.active)
                }) {
                    continue;
                }
                if tm.decisions().iter().zip(base_trace.decisions()).any(|(a, b)| {
                    a.layers.iter().zip(&b.layers).any(|(x, y)| x.active != y.active)
                }) {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.get(key).map_or(0.0, |g| g.data()[j]);
                let err = (fd - an).abs();
                assert!(err < 1e-6 || err / fd.abs().max(an.abs()) < 1e-4, "{key}[{j}]: fd {fd} an {an}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}

#[test]
fn comm_cost_matches_serialized_tensor_bytes() {
    let pair = modularize(&ModelShape::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let spec = SubModelSpec::new(vec![vec![0, 3, 15], vec![1, 2]]);
    let sub = pair.materialize(&spec).unwrap();
    let bytes = sub.to_bytes().unwrap();
    let ckpt = crate::nn::Checkpoint::from_bytes(&bytes).unwrap();
    let header = bytes.len() - ckpt.tensors.iter().map(|(_, t)| t.len() * 8).sum::<usize>();
    assert_eq!(
        (bytes.len() - header) as u64,
        pair.cost_of(&spec).unwrap().comm_bytes
    );
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let pair = modularize(&small_shape(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let sub = pair.materialize(&SubModelSpec::new(vec![vec![1, 3], vec![0]])).unwrap();
    for p in [&pair, &sub] {
        let bytes = p.to_bytes().unwrap();
        let back = ModelPair::from_bytes(&bytes).unwrap();
        assert_eq!(&back, p);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
    let mut ckpt = pair.to_checkpoint(serde_json::Value::Null).unwrap();
    ckpt.tensors.pop();
    assert!(ModelPair::from_checkpoint(&ckpt).is_err());
}

#[test]
fn dimension_mismatch_is_reported() {
    let pair = modularize(&small_shape(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let x = Tensor::zeros(&[2, 7]);
    assert!(matches!(pair.forward(&x, Routing::Eval), Err(Error::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn containment_is_bit_exact(seed in 0u64..1000, extra in proptest::collection::vec(0usize..4, 0..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = modularize(&small_shape(), &mut rng).unwrap();
        let x = batch(&mut rng, 1, 6);
        let (logits, trace) = pair.forward(&x, Routing::Eval).unwrap();
        let dec = trace.decision(0);
        let spec = SubModelSpec::new(
            dec.layers
                .iter()
                .enumerate()
                .map(|(l, d)| {
                    let mut s = d.active.clone();
                    s.extend(extra.iter().filter(|&&e| e % 2 == l % 2));
                    s
                })
                .collect(),
        );
        let (sub_logits, _) = pair.materialize(&spec).unwrap().forward(&x, Routing::Eval).unwrap();
        prop_assert_eq!(sub_logits.data(), logits.data());
    }
}
