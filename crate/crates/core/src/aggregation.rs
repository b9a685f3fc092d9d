//! Merging heterogeneous device updates back into the cloud model.
//!
//! Modules are averaged over the devices that trained them, weighted by each
//! device's importance for that module normalised across contributors.
//! Front blocks, head and selector are averaged by sample count, as are
//! modules under [`ModuleWeighting::SampleCount`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::derivation::ImportanceVector;
use crate::error::{Error, Result};
use crate::modular::{ModelPair, SubModelSpec};
use crate::nn::{ParamGroup, ParamKey, Parameterized, Tensor};

/// A trained sub-model returned by one device.
#[derive(Debug, Clone)]
pub struct DeviceUpdate {
    pub device: usize,
    /// Cloud model version the sub-model was carved from.
    pub base_version: u64,
    pub spec: SubModelSpec,
    pub model: ModelPair,
    pub importance: ImportanceVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleAggregate {
    pub layer: usize,
    pub index: usize,
    pub contributors: usize,
    /// Sum of normalised contributor weights (1 when anyone contributed).
    pub weight_sum: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    /// Version of the cloud model produced by this aggregation.
    pub version: u64,
    pub accepted: Vec<usize>,
    /// Devices whose update was built on an older model.
    pub rejected: Vec<usize>,
    pub modules: Vec<ModuleAggregate>,
    pub untouched: Vec<(usize, usize)>,
    pub shared_delta_norm: f64,
    pub divergence: Divergence,
}

/// Variance across devices of parameter deltas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mean over module groups of each layer; `None` without overlap.
    pub per_layer: Vec<Option<f64>>,
    /// Front blocks, head and selector.
    pub shared: Option<f64>,
    /// Coordinate-weighted mean over every group with ≥2 contributors.
    pub overall: Option<f64>,
}

fn group_map(model: &ModelPair) -> HashMap<ParamKey, &Tensor> {
    model.params().into_iter().collect()
}

/// Weighted sum `Σ w_k t_k`, accumulated in the given order.
fn weighted_sum(parts: &[(f64, &Tensor)]) -> Tensor {
    let (w0, t0) = parts[0];
    let mut acc = t0.clone();
    if w0 != 1.0 {
        acc.data_mut().iter_mut().for_each(|v| *v *= w0);
    }
    for &(w, t) in &parts[1..] {
        for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += w * v;
        }
    }
    acc
}

fn diff_norm(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How contributions to a module are weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleWeighting {
    /// Device importance for the module, normalised over contributors.
    #[default]
    Importance,
    /// Sample count, as in plain federated averaging.
    SampleCount,
}

/// Aggregates `updates` into a copy of `cloud` at `version`.
///
/// Updates built on another version are rejected and listed in the report;
/// if none remain the first rejection is returned as an error.
pub fn aggregate(cloud: &ModelPair, version: u64, updates: &[DeviceUpdate]) -> Result<(ModelPair, AggregationReport)> {
    aggregate_with(cloud, version, updates, ModuleWeighting::Importance)
}

pub fn aggregate_with(
    cloud: &ModelPair,
    version: u64,
    updates: &[DeviceUpdate],
    weighting: ModuleWeighting,
) -> Result<(ModelPair, AggregationReport)> {
    if updates.is_empty() {
        return Err(Error::Config("aggregation needs at least one update".into()));
    }
    let mut ordered: Vec<&DeviceUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device);
    if ordered.windows(2).any(|w| w[0].device == w[1].device) {
        return Err(Error::Config("duplicate device id in aggregation".into()));
    }
    let (fresh, stale): (Vec<&DeviceUpdate>, Vec<&DeviceUpdate>) =
        ordered.into_iter().partition(|u| u.base_version == version);
    if fresh.is_empty() {
        let u = stale[0];
        return Err(Error::Stale {
            device: u.device,
            expected: version,
            got: u.base_version,
        });
    }
    let widths = cloud.layer_widths();
    for u in &fresh {
        u.spec.validate(&widths)?;
        if u.importance.layers.len() != widths.len()
            || u.importance.layers.iter().zip(&widths).any(|(v, &n)| v.len() != n)
        {
            return Err(Error::shape(
                format!("importance of device {}", u.device),
                &widths,
                &u.importance.layers.iter().map(Vec::len).collect::<Vec<_>>(),
            ));
        }
    }
    let maps: Vec<HashMap<ParamKey, &Tensor>> = fresh.iter().map(|u| group_map(&u.model)).collect();
    let module_weight = |u: &DeviceUpdate, l: usize, i: usize| match weighting {
        ModuleWeighting::Importance => u.importance.get(l, i),
        ModuleWeighting::SampleCount => u.sample_count as f64,
    };

    let mut merged_all: HashMap<ParamKey, Tensor> = HashMap::new();
    let mut delta_sq: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut shared_sq = 0.0;
    let mut div = DivergenceAcc::default();

    for (key, base) in cloud.params() {
        // Contributors and their unnormalised weights, in device order.
        let contrib: Vec<(usize, f64)> = match key.group {
            ParamGroup::Module { layer, index } => fresh
                .iter()
                .enumerate()
                .filter(|(_, u)| u.spec.contains(layer, index))
                .map(|(k, u)| (k, module_weight(u, layer, index)))
                .collect(),
            _ => fresh.iter().enumerate().map(|(k, u)| (k, u.sample_count as f64)).collect(),
        };
        if contrib.is_empty() {
            continue;
        }
        let mut parts = Vec::with_capacity(contrib.len());
        for &(k, _) in &contrib {
            let t = maps[k].get(&key).ok_or_else(|| {
                Error::Spec(format!("device {} update lacks parameter {key}", fresh[k].device))
            })?;
            if t.shape() != base.shape() {
                return Err(Error::shape(format!("update of {key}"), base.shape(), t.shape()));
            }
            parts.push(*t);
        }
        let raw_sum: f64 = contrib.iter().map(|c| c.1).sum();
        let weights: Vec<f64> = if raw_sum > 0.0 {
            contrib.iter().map(|c| c.1 / raw_sum).collect()
        } else {
            vec![1.0 / contrib.len() as f64; contrib.len()]
        };
        let merged = weighted_sum(&weights.iter().copied().zip(parts.iter().copied()).collect::<Vec<_>>());
        let delta = diff_norm(&merged, base);
        div.add(key.group, base, &parts);
        match key.group {
            ParamGroup::Module { layer, index } => *delta_sq.entry((layer, index)).or_insert(0.0) += delta * delta,
            _ => shared_sq += delta * delta,
        }
        merged_all.insert(key, merged);
    }
    let mut out = cloud.clone();
    for (key, slot) in out.params_mut() {
        if let Some(t) = merged_all.remove(&key) {
            *slot = t;
        }
    }

    // Built from the specs so parameter-free modules are reported too.
    let mut modules = Vec::new();
    let mut untouched = Vec::new();
    for (l, &n) in widths.iter().enumerate() {
        for i in 0..n {
            let holders: Vec<&&DeviceUpdate> = fresh.iter().filter(|u| u.spec.contains(l, i)).collect();
            if holders.is_empty() {
                untouched.push((l, i));
                continue;
            }
            let raw: f64 = holders.iter().map(|u| module_weight(u, l, i)).sum();
            let weight_sum = if raw > 0.0 {
                holders.iter().map(|u| module_weight(u, l, i) / raw).sum()
            } else {
                1.0
            };
            modules.push(ModuleAggregate {
                layer: l,
                index: i,
                contributors: holders.len(),
                weight_sum,
                delta_norm: delta_sq.get(&(l, i)).copied().unwrap_or(0.0).sqrt(),
            });
        }
    }
    let report = AggregationReport {
        version: version + 1,
        accepted: fresh.iter().map(|u| u.device).collect(),
        rejected: stale.iter().map(|u| u.device).collect(),
        modules,
        untouched,
        shared_delta_norm: shared_sq.sqrt(),
        divergence: div.finish(widths.len()),
    };
    Ok((out, report))
}

#[derive(Default)]
struct DivergenceAcc {
    /// Per group: (sum of per-coordinate variances, coordinate count).
    groups: BTreeMap<ParamGroup, (f64, usize)>,
}

impl DivergenceAcc {
    fn add(&mut self, group: ParamGroup, base: &Tensor, parts: &[&Tensor]) {
        if parts.len() < 2 {
            return;
        }
        let k = parts.len() as f64;
        let e = self.groups.entry(group).or_insert((0.0, 0));
        for (j, b) in base.data().iter().enumerate() {
            let mean = parts.iter().map(|t| t.data()[j] - b).sum::<f64>() / k;
            let var = parts.iter().map(|t| (t.data()[j] - b - mean).powi(2)).sum::<f64>() / k;
            e.0 += var;
        }
        e.1 += base.len();
    }

    fn finish(self, layers: usize) -> Divergence {
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); layers];
        let mut shared = (0.0, 0usize);
        let mut all = (0.0, 0usize);
        for (g, (s, n)) in &self.groups {
            all.0 += s;
            all.1 += n;
            match g {
                ParamGroup::Module { layer, .. } => per_layer[*layer].push(s / *n as f64),
                _ => {
                    shared.0 += s;
                    shared.1 += n;
                }
            }
        }
        let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Divergence {
            per_layer: per_layer.iter().map(mean).collect(),
            shared: (shared.1 > 0).then(|| shared.0 / shared.1 as f64),
            overall: (all.1 > 0).then(|| all.0 / all.1 as f64),
        }
    }
}

/// Divergence of `updates` relative to `base` without aggregating.
pub fn divergence_metric(base: &ModelPair, updates: &[DeviceUpdate]) -> Divergence {
    let mut ordered: Vec<&DeviceUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device);
    let maps: Vec<HashMap<ParamKey, &Tensor>> = ordered.iter().map(|u| group_map(&u.model)).collect();
    let mut div = DivergenceAcc::default();
    for (key, b) in base.params() {
        let parts: Vec<&Tensor> = maps
            .iter()
            .filter_map(|m| m.get(&key).copied())
            .filter(|t| t.shape() == b.shape())
            .collect();
        div.add(key.group, b, &parts);
    }
    div.finish(base.layer_widths().len())
}
