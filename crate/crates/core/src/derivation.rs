//! Per-device sub-model derivation: importance profiling and the
//! multi-dimensional knapsack over candidate modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modular::{ModelPair, ResourceCost, SubModelSpec, DIMENSION_NAMES};
use crate::nn::Tensor;
use crate::selector::UnifiedSelector;

/// Resource maxima per dimension; same units as [`ResourceCost`].
pub type ResourceBudget = ResourceCost;

/// Candidate counts up to this size are solved exactly.
pub const EXACT_LIMIT: usize = 24;

const PROFILE_CHUNK: usize = 256;

/// Mean gate distribution of a device's local data, per module layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub layers: Vec<Vec<f64>>,
}

impl ImportanceVector {
    pub fn uniform(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&n| vec![1.0 / n as f64; n]).collect(),
        }
    }

    pub fn get(&self, layer: usize, index: usize) -> f64 {
        self.layers[layer][index]
    }

    /// Per-layer argmax, ties to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|v| {
                let mut best = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Importance summed over the modules of `spec`.
    pub fn total(&self, spec: &SubModelSpec) -> f64 {
        spec.layers
            .iter()
            .enumerate()
            .flat_map(|(l, set)| set.iter().map(move |&i| (l, i)))
            .map(|(l, i)| self.layers[l][i])
            .sum()
    }
}

/// Average noise-free gate vector of `x` under `selector`.
pub fn importance_profile(selector: &UnifiedSelector, x: &Tensor) -> Result<ImportanceVector> {
    let x = x.clone().as_matrix();
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyDataset("importance profile needs local samples".into()));
    }
    let widths = selector.layer_widths();
    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let mut start = 0;
    while start < n {
        let end = (start + PROFILE_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let gates = selector.gate_probs(&x.select_rows(&rows))?;
        for (acc, g) in sums.iter_mut().zip(&gates) {
            for r in 0..g.rows() {
                for (a, v) in acc.iter_mut().zip(g.row(r)) {
                    *a += v;
                }
            }
        }
        start = end;
    }
    for layer in &mut sums {
        for v in layer.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(ImportanceVector { layers: sums })
}

/// Output of [`derive_submodel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub spec: SubModelSpec,
    pub total_importance: f64,
    /// Cost of the whole sub-model including shared parts.
    pub cost: ResourceCost,
    /// Whether the knapsack stage was solved to optimality.
    pub exact: bool,
}

#[derive(Debug, Clone, Copy)]
struct Item {
    layer: usize,
    index: usize,
    value: f64,
    cost: [u64; 3],
}

fn fits(used: &[u64; 3], cost: &[u64; 3], cap: &[u64; 3]) -> bool {
    (0..3).all(|d| used[d] + cost[d] <= cap[d])
}

/// Chooses the per-device module set.
///
/// Each layer's most important module is always kept; the remaining modules
/// are chosen to maximise total importance within the budget left after the
/// shared parts and the forced picks.
pub fn derive_submodel(
    importance: &ImportanceVector,
    costs: &[Vec<ResourceCost>],
    shared: ResourceCost,
    budget: &ResourceBudget,
) -> Result<Derivation> {
    if importance.layers.len() != costs.len() {
        return Err(Error::shape(
            "importance layers",
            &[costs.len()],
            &[importance.layers.len()],
        ));
    }
    for (l, (imp, c)) in importance.layers.iter().zip(costs).enumerate() {
        if imp.len() != c.len() || imp.is_empty() {
            return Err(Error::shape(format!("importance layer {l}"), &[c.len()], &[imp.len()]));
        }
        if imp.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("importance layer {l} has negative or non-finite entries")));
        }
    }
    let cap = budget.as_array();
    if let Some(d) = (0..3).find(|&d| cap[d] == 0) {
        return Err(Error::Config(format!("budget {} must be positive", DIMENSION_NAMES[d])));
    }

    let forced = importance.argmax();
    let mut used = shared.as_array();
    for (l, &i) in forced.iter().enumerate() {
        let c = costs[l][i].as_array();
        for d in 0..3 {
            used[d] += c[d];
        }
    }
    if let Some(d) = (0..3).find(|&d| used[d] > cap[d]) {
        return Err(Error::Infeasible {
            dimension: DIMENSION_NAMES[d],
            required: used[d],
            available: cap[d],
        });
    }
    let residual = [cap[0] - used[0], cap[1] - used[1], cap[2] - used[2]];

    let items: Vec<Item> = costs
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().map(move |(i, c)| (l, i, c)))
        .filter(|&(l, i, _)| forced[l] != i)
        .map(|(l, i, c)| Item {
            layer: l,
            index: i,
            value: importance.get(l, i),
            cost: c.as_array(),
        })
        .collect();

    let (chosen, exact) = if items.len() <= EXACT_LIMIT {
        (solve_exact(&items, &residual), true)
    } else {
        (solve_greedy(&items, &residual), false)
    };

    let mut layers: Vec<Vec<usize>> = forced.iter().map(|&i| vec![i]).collect();
    for (k, item) in items.iter().enumerate() {
        if chosen[k] {
            layers[item.layer].push(item.index);
        }
    }
    let spec = SubModelSpec::new(layers);
    let mut cost = shared;
    for (l, set) in spec.layers.iter().enumerate() {
        for &i in set {
            cost += costs[l][i];
        }
    }
    Ok(Derivation {
        total_importance: importance.total(&spec),
        spec,
        cost,
        exact,
    })
}

/// Depth-first branch and bound; include-first so ties favour lower indices.
fn solve_exact(items: &[Item], cap: &[u64; 3]) -> Vec<bool> {
    let n = items.len();
    // Per-dimension orders by value density, for the fractional bound.
    let orders: Vec<Vec<usize>> = (0..3)
        .map(|d| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| {
                let da = items[a].value / items[a].cost[d].max(1) as f64;
                let db = items[b].value / items[b].cost[d].max(1) as f64;
                db.total_cmp(&da).then(a.cmp(&b))
            });
            o
        })
        .collect();

    struct Search<'a> {
        items: &'a [Item],
        cap: [u64; 3],
        orders: Vec<Vec<usize>>,
        cur: Vec<bool>,
        best: Vec<bool>,
        best_value: f64,
    }

    impl Search<'_> {
        /// Tightest single-dimension fractional relaxation over items `from..`.
        fn bound(&self, from: usize, used: &[u64; 3]) -> f64 {
            let mut best = f64::INFINITY;
            for d in 0..3 {
                let mut room = (self.cap[d] - used[d]) as f64;
                let mut total = 0.0;
                for &k in &self.orders[d] {
                    if k < from {
                        continue;
                    }
                    let it = &self.items[k];
                    let c = it.cost[d] as f64;
                    if c <= room {
                        room -= c;
                        total += it.value;
                    } else {
                        total += it.value * room / c;
                        break;
                    }
                }
                best = best.min(total);
            }
            best
        }

        fn go(&mut self, k: usize, used: [u64; 3], value: f64) {
            if value > self.best_value {
                self.best_value = value;
                self.best.clone_from(&self.cur);
            }
            if k == self.items.len() || value + self.bound(k, &used) + 1e-12 <= self.best_value {
                return;
            }
            let it = self.items[k];
            if fits(&used, &it.cost, &self.cap) {
                self.cur[k] = true;
                let next = [used[0] + it.cost[0], used[1] + it.cost[1], used[2] + it.cost[2]];
                self.go(k + 1, next, value + it.value);
                self.cur[k] = false;
            }
            self.go(k + 1, used, value);
        }
    }

    let mut s = Search {
        items,
        cap: *cap,
        orders,
        cur: vec![false; n],
        best: vec![false; n],
        best_value: 0.0,
    };
    s.go(0, [0; 3], 0.0);
    s.best
}

/// Greedy by value per normalised cost, then pairwise swaps and refills
/// until no move improves the objective.
fn solve_greedy(items: &[Item], cap: &[u64; 3]) -> Vec<bool> {
    let n = items.len();
    let weight = |it: &Item| -> f64 { (0..3).map(|d| it.cost[d] as f64 / cap[d].max(1) as f64).sum::<f64>() };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = items[a].value / weight(&items[a]).max(1e-300);
        let db = items[b].value / weight(&items[b]).max(1e-300);
        db.total_cmp(&da).then(a.cmp(&b))
    });
    let mut chosen = vec![false; n];
    let mut used = [0u64; 3];
    let add = |used: &mut [u64; 3], c: &[u64; 3]| (0..3).for_each(|d| used[d] += c[d]);
    let sub = |used: &mut [u64; 3], c: &[u64; 3]| (0..3).for_each(|d| used[d] -= c[d]);
    for &k in &order {
        if fits(&used, &items[k].cost, cap) {
            chosen[k] = true;
            add(&mut used, &items[k].cost);
        }
    }
    for _ in 0..(4 * n) {
        let mut improved = false;
        'outer: for out in 0..n {
            if !chosen[out] {
                continue;
            }
            for inn in 0..n {
                if chosen[inn] || items[inn].value <= items[out].value {
                    continue;
                }
                let mut trial = used;
                sub(&mut trial, &items[out].cost);
                if fits(&trial, &items[inn].cost, cap) {
                    chosen[out] = false;
                    chosen[inn] = true;
                    used = trial;
                    add(&mut used, &items[inn].cost);
                    improved = true;
                    break 'outer;
                }
            }
        }
        for &k in &order {
            if !chosen[k] && fits(&used, &items[k].cost, cap) {
                chosen[k] = true;
                add(&mut used, &items[k].cost);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    chosen
}

/// Fraction of each budget dimension a sub-model uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub comm: f64,
    pub compute: f64,
    pub mem: f64,
}

impl Utilization {
    pub fn of(cost: &ResourceCost, budget: &ResourceBudget) -> Self {
        let r = |c: u64, b: u64| c as f64 / b as f64;
        Self {
            comm: r(cost.comm_bytes, budget.comm_bytes),
            compute: r(cost.compute_macs, budget.compute_macs),
            mem: r(cost.mem_bytes, budget.mem_bytes),
        }
    }

    pub fn max(&self) -> f64 {
        self.comm.max(self.compute).max(self.mem)
    }

    pub fn within_budget(&self) -> bool {
        self.max() <= 1.0
    }
}

/// Utilization of `spec` carved out of `pair` against `budget`.
pub fn validate_budget(pair: &ModelPair, spec: &SubModelSpec, budget: &ResourceBudget) -> Result<Utilization> {
    Ok(Utilization::of(&pair.cost_of(spec)?, budget))
}

/// Derives a device's sub-model directly from a cloud model and its local data.
pub fn derive_for_device(pair: &ModelPair, local_x: &Tensor, budget: &ResourceBudget) -> Result<(ImportanceVector, Derivation)> {
    let imp = importance_profile(&pair.selector, local_x)?;
    let d = derive_submodel(&imp, &pair.module_costs(), pair.shared_cost(), budget)?;
    Ok((imp, d))
}
