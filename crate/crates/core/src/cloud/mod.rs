//! Offline cloud stage: end-to-end pretraining with load balancing, the
//! sub-task mapping, the capped assignment and KL-guided fine-tuning.

pub mod assignment;
pub mod taskmap;

pub use assignment::{default_kappa1, solve_assignment, solve_assignment_weighted, Assignment, CapMode};
pub use taskmap::{build_task_map, target_mapping, task_map_from_gates, Matrix, SubTaskRule};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modular::ModelPair;
use crate::nn::{argmax, sgd_step, SgdConfig, Tape, Tensor};
use crate::rng::stream;
use crate::selector::{Routing, KL_EPS};

/// A layer whose busiest module receives more than this fraction of samples is collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Weight of the load-balancing loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Initial logit-noise scale, annealed linearly to zero over pretraining.
    pub noise_scale: f64,
    /// Lower bound on the smoothing scale of the routed-load estimate.
    pub load_smoothing: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lambda: 0.1,
            learning_rate: 0.02,
            batch_size: 16,
            noise_scale: 1.0,
            load_smoothing: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Weight of the KL guidance loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lambda: 1.0,
            learning_rate: 0.05,
            batch_size: 16,
        }
    }
}

/// One epoch of the offline training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub ce_loss: f64,
    /// Mean unweighted auxiliary loss (load balance or KL guidance).
    pub aux_loss: f64,
    pub loss: f64,
    /// Eval-mode accuracy on the training data after the epoch.
    pub accuracy: f64,
    /// Eval-mode routing loads on the training data after the epoch.
    pub loads: RoutingLoads,
    /// Per layer, the largest fraction of samples routed to one module.
    pub max_load: Vec<f64>,
    /// Some layer sends more than [`COLLAPSE_THRESHOLD`] of all samples to one module.
    pub collapse: bool,
}

enum Aux<'a> {
    /// Squared coefficients of variation of gate mass and of smoothed routed load.
    LoadBalance { smoothing: f64 },
    Guidance { targets: &'a [Matrix], subtasks: &'a [usize] },
}

/// Eval-mode routing loads of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingLoads {
    /// Mean gate mass per module, per layer (sums to 1 per layer).
    pub mass: Vec<Vec<f64>>,
    /// Fraction of samples routed to (activating) each module, per layer
    /// (sums to `k` per layer).
    pub routed: Vec<Vec<f64>>,
}

impl RoutingLoads {
    pub fn max_routed(&self) -> Vec<f64> {
        self.routed.iter().map(|l| l.iter().copied().fold(0.0, f64::max)).collect()
    }

    pub fn min_routed(&self) -> Vec<f64> {
        self.routed.iter().map(|l| l.iter().copied().fold(f64::INFINITY, f64::min)).collect()
    }
}

/// Gate mass and routed-sample fractions of `x` under eval routing.
pub fn eval_loads(pair: &ModelPair, x: &Tensor) -> Result<RoutingLoads> {
    let gates = pair.selector.gate_probs(x)?;
    let k = pair.selector.k;
    let mut mass = Vec::with_capacity(gates.len());
    let mut routed = Vec::with_capacity(gates.len());
    for g in &gates {
        let rows = g.rows().max(1) as f64;
        let mut m = vec![0.0; g.cols()];
        let mut c = vec![0.0; g.cols()];
        for r in 0..g.rows() {
            for (a, v) in m.iter_mut().zip(g.row(r)) {
                *a += v;
            }
            for i in crate::nn::top_k(g.row(r), k) {
                c[i] += 1.0;
            }
        }
        mass.push(m.iter().map(|v| v / rows).collect());
        routed.push(c.iter().map(|v| v / rows).collect());
    }
    Ok(RoutingLoads { mass, routed })
}

#[allow(clippy::too_many_arguments)]
fn fit(
    pair: &mut ModelPair,
    data: &Dataset,
    stage: &str,
    epochs: usize,
    sgd: &SgdConfig,
    lambda: f64,
    noise_start: f64,
    aux: Aux<'_>,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{stage} needs training data")));
    }
    sgd.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let batches_per_epoch = data.len().div_ceil(sgd.batch_size);
    let total_steps = (epochs * batches_per_epoch).max(1) as f64;
    let mut noise_rng = stream(seed, stage, 1, 0);
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(seed, stage, 0, epoch as u64));
        let (mut ce_sum, mut aux_sum) = (0.0, 0.0);
        for idx in order.chunks(sgd.batch_size) {
            let x = data.x.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let scale = noise_start * (1.0 - step as f64 / total_steps);
            let mut routing = if scale > 0.0 {
                Routing::Noisy {
                    scale,
                    rng: &mut noise_rng,
                }
            } else {
                Routing::Eval
            };
            let mut tape = Tape::new();
            let out = pair.forward_tape(&mut tape, &x, &mut routing)?;
            let ce = tape.cross_entropy(out.logits, &labels)?;
            let mut terms = Vec::with_capacity(out.gates.len());
            for (l, &g) in out.gates.iter().enumerate() {
                let term = match &aux {
                    Aux::LoadBalance { smoothing } => {
                        let m = tape.mean_rows(g)?;
                        let importance = tape.cv_squared(m)?;
                        let load = tape.smooth_load(
                            out.selector_logits[l],
                            out.thresholds[l].clone(),
                            scale.max(*smoothing),
                        )?;
                        let load = tape.cv_squared(load)?;
                        tape.add(importance, load)?
                    }
                    Aux::Guidance { targets, subtasks } => {
                        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| targets[l][subtasks[i]].clone()).collect();
                        tape.kl_div(Tensor::from_rows(&rows)?, g, KL_EPS)?
                    }
                };
                terms.push(term);
            }
            let aux_total = tape.sum(&terms)?;
            let weighted = tape.scale(aux_total, lambda)?;
            let loss = tape.add(ce, weighted)?;
            ce_sum += tape.value(ce).item();
            aux_sum += tape.value(aux_total).item();
            let grads = tape.backward(loss)?;
            sgd_step(pair, &grads, sgd)?;
            step += 1;
        }
        let loads = eval_loads(pair, &data.x)?;
        let max_load = loads.max_routed();
        let ce_loss = ce_sum / batches_per_epoch as f64;
        let aux_loss = aux_sum / batches_per_epoch as f64;
        if !ce_loss.is_finite() || !aux_loss.is_finite() {
            return Err(Error::Divergence {
                stage: stage.into(),
                detail: format!("epoch {epoch}: loss is not finite"),
            });
        }
        log.push(EpochLog {
            stage: stage.into(),
            epoch,
            ce_loss,
            aux_loss,
            loss: ce_loss + lambda * aux_loss,
            accuracy: pair.accuracy(&data.x, &data.labels)?,
            collapse: max_load.iter().any(|&m| m > COLLAPSE_THRESHOLD),
            loads,
            max_load,
        });
    }
    Ok(log)
}

/// End-to-end pretraining on `CE + λ·Σ_l [CV²(gate mass) + CV²(routed load)]`
/// with noisy top-k. The routed load of module `i` is the batch sum of
/// `Φ((z_i − t_i)/s)`, the probability that `i` enters the top-k under noise.
pub fn pretrain(pair: &mut ModelPair, data: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<Vec<EpochLog>> {
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
    };
    if !(cfg.load_smoothing > 0.0) {
        return Err(Error::Config("load_smoothing must be positive".into()));
    }
    let aux = Aux::LoadBalance {
        smoothing: cfg.load_smoothing,
    };
    fit(pair, data, "pretrain", cfg.epochs, &sgd, cfg.lambda, cfg.noise_scale, aux, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub log: Vec<EpochLog>,
    /// Sub-task mapping matrix measured after fine-tuning.
    pub h_after: Vec<Matrix>,
    /// Per layer, per sub-task gate mass on the modules selected by `M`.
    pub alignment: Vec<Vec<f64>>,
}

/// Fine-tunes on `CE + λ·Σ_l KL(P_l[subtask] ‖ gates_l)`.
///
/// `targets[l]` is the `T × N` target mapping of layer `l`; every row must be
/// a distribution.
pub fn finetune_enhance(
    pair: &mut ModelPair,
    data: &Dataset,
    subtasks: &[usize],
    targets: &[Matrix],
    masks: &[Vec<Vec<bool>>],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    if subtasks.len() != data.len() {
        return Err(Error::shape("sub-task ids", &[data.len()], &[subtasks.len()]));
    }
    let widths = pair.layer_widths();
    if targets.len() != widths.len() || masks.len() != widths.len() {
        return Err(Error::shape("target mapping layers", &[widths.len()], &[targets.len(), masks.len()]));
    }
    let t = targets[0].len();
    for (l, p) in targets.iter().enumerate() {
        if p.len() != t || p.iter().any(|r| r.len() != widths[l]) {
            return Err(Error::shape(format!("target mapping layer {l}"), &[t, widths[l]], &[p.len()]));
        }
        if p.iter().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|v| *v < 0.0)) {
            return Err(Error::Config(format!("target mapping layer {l} has a row that is not a distribution")));
        }
    }
    if let Some(&bad) = subtasks.iter().find(|&&s| s >= t) {
        return Err(Error::Index {
            what: "sub-task",
            index: bad,
            bound: t,
        });
    }
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
    };
    let log = fit(
        pair,
        data,
        "finetune",
        cfg.epochs,
        &sgd,
        cfg.lambda,
        0.0,
        Aux::Guidance { targets, subtasks },
        seed,
    )?;
    let h_after = build_task_map(&pair.selector, &data.x, subtasks, t)?;
    let alignment = h_after
        .iter()
        .zip(masks)
        .map(|(h, m)| {
            h.iter()
                .zip(m)
                .map(|(hr, mr)| hr.iter().zip(mr).filter(|(_, &b)| b).map(|(v, _)| v).sum())
                .collect()
        })
        .collect();
    Ok(FinetuneReport {
        log,
        h_after,
        alignment,
    })
}

/// Per-layer predictions of the modules most used by each sub-task (top-k of `H`).
pub fn top_modules(h: &Matrix, k: usize) -> Vec<Vec<usize>> {
    h.iter().map(|row| crate::nn::top_k(row, k.min(row.len()))).collect()
}

/// Fraction of rows whose argmax logit equals the label.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests;
