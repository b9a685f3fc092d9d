//! Device fleet and its dynamics. Every draw comes from streams keyed by
//! `(seed, device, round)`, so all strategies of a scenario observe the same
//! partitions, participants, shifts and budgets.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::data::PreparedData;
use crate::data::Dataset;
use crate::derivation::ResourceBudget;
use crate::env::{
    fluctuate, partition_noniid, sample_tiers, shift_data, tier_budget, DeviceData, KeyedPool, ShiftEvent, SkewKind,
};
use crate::env::SyntheticTask;
use crate::error::Result;
use crate::modular::ResourceCost;
use crate::rng::stream;

/// What happened to the fleet at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEnv {
    pub round: u64,
    /// Sampled devices, ascending.
    pub participants: Vec<usize>,
    /// Budget of each participant this round, in participant order.
    pub budgets: Vec<ResourceBudget>,
    pub shifts: Vec<ShiftEvent>,
}

#[derive(Debug, Clone)]
pub struct Environment {
    seed: u64,
    cfg: ScenarioConfig,
    pub devices: Vec<DeviceData>,
    /// Tier fraction of each device.
    pub tiers: Vec<f64>,
    pub base_budgets: Vec<ResourceBudget>,
    /// Bumped whenever a device's data changes.
    pub data_version: Vec<u64>,
    /// Shift events so far (the drift level of the task).
    pub shift_count: usize,
    shift_pool: KeyedPool,
    task: Option<SyntheticTask>,
    /// Every key a class drift may swap in.
    all_keys: Vec<usize>,
}

impl Environment {
    pub fn new(cfg: &ScenarioConfig, data: &PreparedData, full_cost: &ResourceCost) -> Result<Self> {
        let seed = cfg.seed;
        let fleet = &cfg.fleet;
        let mut edge = KeyedPool::new(data.edge.clone(), fleet.skew, &mut stream(seed, "edge_pool", 0, 0));
        let devices = partition_noniid(&mut edge, fleet.num_devices, fleet.m, fleet.size_range, seed)?;
        let shift_pool = KeyedPool::new(data.shift_pool.clone(), fleet.skew, &mut stream(seed, "shift_pool", 0, 0));
        let tiers = sample_tiers(&fleet.tiers, fleet.num_devices, seed);
        let base_budgets = tiers.iter().map(|&t| tier_budget(full_cost, t)).collect();
        let all_keys = edge.live_keys();
        Ok(Self {
            seed,
            cfg: cfg.clone(),
            data_version: vec![0; devices.len()],
            devices,
            tiers,
            base_budgets,
            shift_count: 0,
            shift_pool,
            task: data.task.clone().filter(|_| data.drifts()),
            all_keys,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn data(&self, device: usize) -> &Dataset {
        &self.devices[device].data
    }

    /// Rows drawn from the shift pool more than once.
    pub fn reused_pool_rows(&self) -> usize {
        self.shift_pool.reused
    }

    fn is_shift_round(&self, round: u64) -> bool {
        let p = self.cfg.dynamics.shift_period as u64;
        p > 0 && round > 0 && round % p == 0
    }

    /// Applies this round's shifts, then samples participants and their budgets.
    pub fn begin_round(&mut self, round: u64) -> Result<RoundEnv> {
        let mut shifts = Vec::new();
        if self.is_shift_round(round) {
            self.shift_count += 1;
            let level = self.shift_count as f64;
            let drift_keys = self.cfg.dynamics.class_drift.then(|| self.all_keys.clone());
            for d in 0..self.devices.len() {
                let mut rng = stream(self.seed, "shift", d as u64, round);
                let mut draw_rng = stream(self.seed, "shift_draw", d as u64, round);
                let pool = &mut self.shift_pool;
                let task = self.task.as_ref();
                let kind = self.devices[d].kind;
                let ev = shift_data(
                    &mut self.devices[d],
                    self.cfg.dynamics.shift_fraction,
                    drift_keys.as_deref(),
                    |key, n| match task {
                        Some(t) => Ok(match kind {
                            SkewKind::Label => t.sample_class(key, n, level, &mut draw_rng),
                            SkewKind::Feature => t.sample_group(key, n, level, &mut draw_rng),
                        }),
                        None => pool.take(key, n, &mut draw_rng),
                    },
                    &mut rng,
                )?;
                if ev.replaced > 0 || ev.swapped.is_some() {
                    self.data_version[d] += 1;
                }
                shifts.push(ev);
            }
        }
        let n = self.devices.len();
        let k = self.cfg.fleet.participants().min(n);
        let mut participants = sample(&mut stream(self.seed, "participation", round, 0), n, k).into_vec();
        participants.sort_unstable();
        let budgets = participants
            .iter()
            .map(|&d| fluctuate(&self.base_budgets[d], self.cfg.dynamics.fluctuation, d, round, self.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundEnv {
            round,
            participants,
            budgets,
            shifts,
        })
    }
}
