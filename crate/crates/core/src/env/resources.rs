//! Device resource budgets: tiers as fractions of full-model cost, plus
//! per-round fluctuation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::derivation::ResourceBudget;
use crate::error::{Error, Result};
use crate::modular::{ModelPair, ResourceCost};
use crate::rng::stream;

/// Default tier fractions of the full model's cost.
pub const DEFAULT_TIERS: [f64; 5] = [0.2, 0.35, 0.5, 0.75, 1.0];

fn scaled(v: u64, f: f64) -> u64 {
    (v as f64 * f).floor() as u64
}

/// `full` scaled by `fraction` in every dimension.
pub fn tier_budget(full: &ResourceCost, fraction: f64) -> ResourceBudget {
    ResourceCost {
        comm_bytes: scaled(full.comm_bytes, fraction),
        compute_macs: scaled(full.compute_macs, fraction),
        mem_bytes: scaled(full.mem_bytes, fraction),
    }
}

/// Cheapest budget that admits any per-layer forced pick: shared parts plus
/// the most expensive module of each layer, per dimension.
pub fn forced_minimum(pair: &ModelPair) -> ResourceCost {
    let mut total = pair.shared_cost();
    for layer in pair.module_costs() {
        let max = |f: fn(&ResourceCost) -> u64| layer.iter().map(f).max().unwrap_or(0);
        total += ResourceCost {
            comm_bytes: max(|c| c.comm_bytes),
            compute_macs: max(|c| c.compute_macs),
            mem_bytes: max(|c| c.mem_bytes),
        };
    }
    total
}

/// Rejects tiers that cannot hold every possible forced pick.
pub fn validate_tiers(pair: &ModelPair, tiers: &[f64]) -> Result<()> {
    if tiers.is_empty() {
        return Err(Error::Config("at least one resource tier is required".into()));
    }
    let full = pair.total_cost();
    let need = forced_minimum(pair);
    for &t in tiers {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Config(format!("resource tier {t} must be positive")));
        }
        if !need.fits_within(&tier_budget(&full, t)) {
            return Err(Error::Config(format!(
                "resource tier {t} is below the forced-minimum sub-model cost"
            )));
        }
    }
    Ok(())
}

/// Stratified tier assignment: devices are shuffled, then dealt tiers in
/// round-robin order. Returns each device's tier fraction.
pub fn sample_tiers(tiers: &[f64], num_devices: usize, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..num_devices).collect();
    order.shuffle(&mut stream(seed, "tiers", 0, 0));
    let mut out = vec![0.0; num_devices];
    for (pos, &d) in order.iter().enumerate() {
        out[d] = tiers[pos % tiers.len()];
    }
    out
}

pub fn sample_resources(full: &ResourceCost, tiers: &[f64], num_devices: usize, seed: u64) -> Vec<ResourceBudget> {
    sample_tiers(tiers, num_devices, seed)
        .into_iter()
        .map(|t| tier_budget(full, t))
        .collect()
}

/// Budget of `device` in `round`: compute and memory scaled by a factor
/// drawn uniformly from `range`. Communication is left as is.
pub fn fluctuate(budget: &ResourceBudget, range: (f64, f64), device: usize, round: u64, seed: u64) -> Result<ResourceBudget> {
    let (lo, hi) = range;
    if !(lo > 0.0) || lo > hi || !hi.is_finite() {
        return Err(Error::Config(format!("bad fluctuation range [{lo}, {hi}]")));
    }
    if lo == hi {
        if lo == 1.0 {
            return Ok(*budget);
        }
        return Ok(ResourceCost {
            compute_macs: scaled(budget.compute_macs, lo),
            mem_bytes: scaled(budget.mem_bytes, lo),
            ..*budget
        });
    }
    let f = stream(seed, "fluctuate", device as u64, round).random_range(lo..=hi);
    Ok(ResourceCost {
        compute_macs: scaled(budget.compute_macs, f),
        mem_bytes: scaled(budget.mem_bytes, f),
        ..*budget
    })
}
