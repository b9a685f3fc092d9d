//! Unified module selector.
//!
//! An embedding MLP maps the raw input to a feature `h`; one dense head per
//! module layer maps `h` to logits, and a softmax turns them into that
//! layer's gate distribution. The `k` largest gates are activated. In
//! training mode Gaussian noise is added to the logits before the softmax
//! (noisy top-k), and the reported gates are those of the noisy logits.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modular::{LayerDecision, RoutingDecision};
use crate::nn::params::{ParamGroup, ParamKey, Parameterized};
use crate::nn::tape::{cv_squared, Tape, Var};
use crate::nn::{top_k, Activation, DenseLayer, Tensor};

/// Smoothing used inside the log of the guidance KL.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSelector {
    pub embed: Vec<DenseLayer>,
    pub heads: Vec<DenseLayer>,
    pub k: usize,
    /// Standard deviation of the logit noise used in training mode.
    pub noise_scale: f64,
}

/// How gates are produced for a forward pass.
pub enum Routing<'a> {
    Eval,
    Noisy { scale: f64, rng: &'a mut dyn RngCore },
}

impl Routing<'_> {
    pub fn noise(&self) -> f64 {
        match self {
            Routing::Eval => 0.0,
            Routing::Noisy { scale, .. } => *scale,
        }
    }
}

/// One layer of selector output recorded on a tape.
#[derive(Debug, Clone)]
pub struct SelectorLayer {
    /// Noise-free logits `[B, N]`.
    pub logits: Var,
    /// Per entry, the logit a module must exceed to enter the top-k of its
    /// row when competing against the other (possibly noisy) logits.
    pub thresholds: Tensor,
    pub gates: Var,
    /// `[B, N]` activation mask of the top-k set.
    pub mask: Vec<bool>,
    pub active: Vec<Vec<usize>>,
}

impl UnifiedSelector {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dims: &[usize],
        layer_widths: &[usize],
        k: usize,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&n) = layer_widths.iter().find(|&&n| k > n) {
            return Err(Error::Config(format!("k = {k} exceeds layer width {n}")));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut embed = Vec::new();
        let mut prev = input_dim;
        for &d in embed_dims {
            embed.push(DenseLayer::glorot(prev, d, Activation::Relu, rng));
            prev = d;
        }
        let heads = layer_widths
            .iter()
            .map(|&n| DenseLayer::glorot(prev, n, Activation::Identity, rng))
            .collect();
        Ok(Self {
            embed,
            heads,
            k,
            noise_scale,
        })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.embed.first().or(self.heads.first()).map(DenseLayer::in_dim)
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.heads.iter().map(DenseLayer::out_dim).collect()
    }

    /// Records the selector on `tape` and returns per-layer gates and top-k sets.
    pub fn route_tape(&self, tape: &mut Tape, x: Var, routing: &mut Routing<'_>) -> Result<Vec<SelectorLayer>> {
        let mut h = x;
        for (i, layer) in self.embed.iter().enumerate() {
            h = layer.forward_tape(tape, h, ParamGroup::Selector, &format!("embed{i}."))?;
        }
        let batch = tape.value(x).rows();
        let mut out = Vec::with_capacity(self.heads.len());
        for (l, head) in self.heads.iter().enumerate() {
            let n = head.out_dim();
            if self.k > n {
                return Err(Error::Config(format!("k = {} exceeds width {n} of layer {l}", self.k)));
            }
            let clean = head.forward_tape(tape, h, ParamGroup::Selector, &format!("head{l}."))?;
            let mut logits = clean;
            if let Routing::Noisy { scale, rng } = routing {
                if *scale > 0.0 {
                    let noise: Vec<f64> = (0..batch * n)
                        .map(|_| *scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    logits = tape.add_const(logits, &Tensor::new(vec![batch, n], noise)?)?;
                }
            }
            let thresholds = topk_thresholds(tape.value(logits), self.k);
            let gates = tape.softmax(logits)?;
            let gv = tape.value(gates);
            let mut mask = vec![false; batch * n];
            let mut active = Vec::with_capacity(batch);
            for r in 0..batch {
                let a = top_k(gv.row(r), self.k);
                for &i in &a {
                    mask[r * n + i] = true;
                }
                active.push(a);
            }
            out.push(SelectorLayer {
                logits: clean,
                thresholds,
                gates,
                mask,
                active,
            });
        }
        Ok(out)
    }

    /// Routing decisions for each row of `x`.
    pub fn select(&self, x: &Tensor, mut routing: Routing<'_>) -> Result<Vec<RoutingDecision>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().as_matrix());
        self.check_input(tape.value(xv))?;
        let layers = self.route_tape(&mut tape, xv, &mut routing)?;
        let batch = tape.value(xv).rows();
        Ok((0..batch)
            .map(|r| RoutingDecision {
                layers: layers
                    .iter()
                    .map(|sl| LayerDecision {
                        gates: tape.value(sl.gates).row(r).to_vec(),
                        active: sl.active[r].clone(),
                    })
                    .collect(),
            })
            .collect())
    }

    /// Noise-free gate matrices `[B, N_l]`, one per layer.
    pub fn gate_probs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().as_matrix());
        self.check_input(tape.value(xv))?;
        let layers = self.route_tape(&mut tape, xv, &mut Routing::Eval)?;
        Ok(layers.iter().map(|sl| tape.value(sl.gates).clone()).collect())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match self.input_dim() {
            Some(d) if d != x.cols() => Err(Error::shape("selector input", &[d], &[x.cols()])),
            _ => Ok(()),
        }
    }
}

impl Parameterized for UnifiedSelector {
    fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.embed.iter().enumerate() {
            l.params(ParamGroup::Selector, &format!("embed{i}."), &mut out);
        }
        for (i, l) in self.heads.iter().enumerate() {
            l.params(ParamGroup::Selector, &format!("head{i}."), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.embed.iter_mut().enumerate() {
            l.params_mut(ParamGroup::Selector, &format!("embed{i}."), &mut out);
        }
        for (i, l) in self.heads.iter_mut().enumerate() {
            l.params_mut(ParamGroup::Selector, &format!("head{i}."), &mut out);
        }
        out
    }
}

/// For every entry `(b, i)`, the `k`-th largest value of row `b` with entry
/// `i` left out; `-∞` when the row has no more than `k` entries.
pub fn topk_thresholds(logits: &Tensor, k: usize) -> Tensor {
    let (rows, n) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let row = logits.row(r);
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let kth = sorted.get(k - 1).copied().unwrap_or(f64::NEG_INFINITY);
        let next = sorted.get(k).copied().unwrap_or(f64::NEG_INFINITY);
        for &v in row {
            // Leaving out a member of the top-k promotes the (k+1)-th value.
            out.push(if v >= kth { next } else { kth });
        }
    }
    Tensor::new(vec![rows, n], out).expect("threshold shape")
}

/// Per-layer batch routing statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingBatchStats {
    /// Mean gate mass per module, per layer.
    pub loads: Vec<Vec<f64>>,
    /// Number of samples that activated each module, per layer.
    pub counts: Vec<Vec<usize>>,
    pub batch_size: usize,
}

impl RoutingBatchStats {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn min_load(&self) -> f64 {
        self.loads.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn routing_stats(traces: &[RoutingDecision]) -> Result<RoutingBatchStats> {
    let first = traces
        .first()
        .ok_or_else(|| Error::EmptyDataset("routing_stats needs at least one trace".into()))?;
    let mut loads: Vec<Vec<f64>> = first.layers.iter().map(|l| vec![0.0; l.gates.len()]).collect();
    let mut counts: Vec<Vec<usize>> = first.layers.iter().map(|l| vec![0; l.gates.len()]).collect();
    for t in traces {
        if t.layers.len() != loads.len() {
            return Err(Error::shape("routing trace layers", &[loads.len()], &[t.layers.len()]));
        }
        for (l, d) in t.layers.iter().enumerate() {
            if d.gates.len() != loads[l].len() {
                return Err(Error::shape("routing trace gates", &[loads[l].len()], &[d.gates.len()]));
            }
            for (acc, g) in loads[l].iter_mut().zip(&d.gates) {
                *acc += g;
            }
            for &i in &d.active {
                counts[l][i] += 1;
            }
        }
    }
    let n = traces.len() as f64;
    for l in &mut loads {
        for v in l.iter_mut() {
            *v /= n;
        }
    }
    Ok(RoutingBatchStats {
        loads,
        counts,
        batch_size: traces.len(),
    })
}

/// Sum over layers of the squared coefficient of variation of module loads.
pub fn load_balance_loss(stats: &RoutingBatchStats) -> f64 {
    stats.loads.iter().map(|l| cv_squared(l)).sum()
}

/// `Σ_l KL(target_l ‖ gates_l)` with `ε` smoothing inside the log.
pub fn kl_guidance_loss(gates: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if gates.len() != targets.len() {
        return Err(Error::shape("kl layers", &[gates.len()], &[targets.len()]));
    }
    let mut total = 0.0;
    for (q, p) in gates.iter().zip(targets) {
        if q.len() != p.len() {
            return Err(Error::shape("kl distribution", &[q.len()], &[p.len()]));
        }
        total += p
            .iter()
            .zip(q)
            .map(|(&p, &q)| if p > 0.0 { p * ((p + KL_EPS) / (q + KL_EPS)).ln() } else { 0.0 })
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Selector whose single head emits `logits` regardless of input.
    fn fixed_logits(logits: &[f64], k: usize) -> UnifiedSelector {
        let n = logits.len();
        let head = DenseLayer::from_parts(Tensor::zeros(&[n, 1]), Tensor::vector(logits.to_vec()), Activation::Identity)
            .unwrap();
        UnifiedSelector {
            embed: vec![],
            heads: vec![head],
            k,
            noise_scale: 0.0,
        }
    }

    #[test]
    fn top_k_from_head_logits() {
        let sel = fixed_logits(&[3.0, 1.0, 2.0], 2);
        let d = sel.select(&Tensor::vector(vec![0.0]), Routing::Eval).unwrap();
        assert_eq!(d[0].layers[0].active, vec![0, 2]);
        assert!((d[0].layers[0].gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_width_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            UnifiedSelector::new(4, &[3], &[2, 4], 3, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
        let sel = fixed_logits(&[1.0, 2.0], 3);
        assert!(sel.select(&Tensor::vector(vec![0.0]), Routing::Eval).is_err());
    }

    #[test]
    fn zero_noise_training_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = UnifiedSelector::new(5, &[4], &[6, 3], 2, 0.0, &mut rng).unwrap();
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let eval = sel.select(&x, Routing::Eval).unwrap();
        let mut noise_rng = rng::stream(0, "t", 0, 0);
        let train = sel
            .select(&x, Routing::Noisy { scale: 0.0, rng: &mut noise_rng })
            .unwrap();
        assert_eq!(eval, train);
    }

    #[test]
    fn noisy_top_k_frequencies_on_flat_logits() {
        let sel = fixed_logits(&[1.0, 1.0, 1.0], 2);
        let mut rng = rng::stream(42, "noise", 0, 0);
        let x = Tensor::zeros(&[10_000, 1]);
        let d = sel.select(&x, Routing::Noisy { scale: 1.0, rng: &mut rng }).unwrap();
        let stats = routing_stats(&d).unwrap();
        for &c in &stats.counts[0] {
            let f = c as f64 / 10_000.0;
            assert!((0.60..=0.73).contains(&f), "frequency {f}");
        }
        assert_eq!(stats.counts[0].iter().sum::<usize>(), 20_000);
    }

    #[test]
    fn load_balance_reference_values() {
        let uniform = RoutingBatchStats {
            loads: vec![vec![0.25; 4]],
            counts: vec![vec![0; 4]],
            batch_size: 1,
        };
        assert!(load_balance_loss(&uniform).abs() < 1e-15);
        for n in 2..10 {
            let mut loads = vec![0.0; n];
            loads[n / 2] = 1.0;
            let s = RoutingBatchStats {
                loads: vec![loads.clone(), loads],
                counts: vec![vec![0; n]; 2],
                batch_size: 1,
            };
            assert!((load_balance_loss(&s) - 2.0 * (n as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn load_balance_matches_direct_variance_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let loads: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let n = loads.len() as f64;
            let mean = loads.iter().sum::<f64>() / n;
            let var = loads.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = RoutingBatchStats {
                loads: vec![loads],
                counts: vec![vec![0; 7]],
                batch_size: 1,
            };
            assert!((load_balance_loss(&s) - var / (mean * mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_reference_values() {
        let p = vec![vec![0.2, 0.3, 0.5]];
        assert!(kl_guidance_loss(&p, &p).unwrap().abs() < 1e-12);
        let v = kl_guidance_loss(&[vec![0.5, 0.5]], &[vec![1.0, 0.0]]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| {
                let r: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
            let got = kl_guidance_loss(&[q], &[p]).unwrap();
            assert!((got - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn routing_stats_reference_values() {
        let one = RoutingDecision {
            layers: vec![LayerDecision {
                gates: vec![0.7, 0.3],
                active: vec![0],
            }],
        };
        assert_eq!(routing_stats(&[one.clone()]).unwrap().loads[0], vec![0.7, 0.3]);
        let a = RoutingDecision {
            layers: vec![LayerDecision {
                gates: vec![1.0, 0.0],
                active: vec![0],
            }],
        };
        let b = RoutingDecision {
            layers: vec![LayerDecision {
                gates: vec![0.0, 1.0],
                active: vec![1],
            }],
        };
        assert_eq!(routing_stats(&[a, b]).unwrap().loads[0], vec![0.5, 0.5]);
        assert!(routing_stats(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sel = UnifiedSelector::new(3, &[4], &[4, 4], 2, 0.0, &mut rng).unwrap();
        let x = Tensor::new(vec![16, 3], (0..48).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let stats = routing_stats(&sel.select(&x, Routing::Eval).unwrap()).unwrap();
        for l in 0..2 {
            assert_eq!(stats.counts[l].iter().sum::<usize>(), 32);
            assert!((stats.loads[l].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn top_k_invariant_to_logit_shift(
            base in proptest::collection::vec(-50i32..50, 3..9),
            shift in -100.0f64..100.0,
            k in 1usize..3,
        ) {
            // Integer-spaced logits keep ranks clear of rounding ties.
            let logits: Vec<f64> = base.iter().map(|&v| v as f64 * 0.01).collect();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let x = Tensor::vector(vec![0.0]);
            let a = fixed_logits(&logits, k).select(&x, Routing::Eval).unwrap();
            let b = fixed_logits(&shifted, k).select(&x, Routing::Eval).unwrap();
            prop_assert_eq!(&a[0].layers[0].active, &b[0].layers[0].active);
        }

        #[test]
        fn loads_always_sum_to_one(seed in 0u64..500, batch in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = UnifiedSelector::new(4, &[5], &[3, 6], 2, 1.0, &mut rng).unwrap();
            let x = Tensor::new(vec![batch, 4], (0..batch * 4).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let mut noise = rng::stream(seed, "p", 0, 0);
            let d = sel.select(&x, Routing::Noisy { scale: 1.0, rng: &mut noise }).unwrap();
            let stats = routing_stats(&d).unwrap();
            for l in &stats.loads {
                prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
