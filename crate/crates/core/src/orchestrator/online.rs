//! Online rounds: per-device derivation and local training, aggregation,
//! environment dynamics, metrics and the event log.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{self as art, write_jsonl};
use super::config::{ScenarioConfig, Strategy};
use super::data::PreparedData;
use super::environment::Environment;
use crate::aggregation::{aggregate_with, AggregationReport, DeviceUpdate, ModuleWeighting};
use crate::cloud::eval_loads;
use crate::data::Dataset;
use crate::derivation::{derive_submodel, importance_profile, ImportanceVector, ResourceBudget};
use crate::env::{local_train, ShiftEvent};
use crate::error::{Error, Result};
use crate::modular::{ModelPair, ResourceCost, SubModelSpec};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Materialized sub-model plus its spec.
    SubModel,
    /// Full cloud checkpoint.
    FullModel,
    /// Trained sub-model plus the importance vector.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveReason {
    Initial,
    DataShift,
    /// Budget fluctuation pushed the cached spec over budget.
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Participation {
        round: u64,
        devices: Vec<usize>,
    },
    Shift {
        round: u64,
        #[serde(flatten)]
        shift: ShiftEvent,
    },
    Derive {
        round: u64,
        device: usize,
        reason: DeriveReason,
        spec: SubModelSpec,
        total_importance: f64,
        exact: bool,
        cost: ResourceCost,
        budget: ResourceBudget,
    },
    Transfer {
        round: u64,
        device: usize,
        direction: Direction,
        payload: Payload,
        bytes: u64,
    },
    Skip {
        round: u64,
        device: usize,
        class: String,
        reason: String,
    },
    Aggregation {
        round: u64,
        report: AggregationReport,
    },
}

/// One record of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub strategy: Strategy,
    /// Cloud model version after the round.
    pub version: u64,
    pub participants: usize,
    pub trained: usize,
    pub skipped: usize,
    /// Cloud model on the (drift-matched) global evaluation set.
    pub global_accuracy: f64,
    /// Participants' model accuracy on their local data, before and after
    /// local training.
    pub local_accuracy_pre: Option<f64>,
    pub local_accuracy_mean: Option<f64>,
    pub local_accuracy_std: Option<f64>,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub cumulative_bytes_down: u64,
    pub cumulative_bytes_up: u64,
    pub divergence: Option<f64>,
    pub divergence_per_layer: Vec<Option<f64>>,
    pub divergence_shared: Option<f64>,
    /// Per layer, fraction of evaluation samples routed to each module.
    pub loads: Vec<Vec<f64>>,
    pub shifts: usize,
}

/// Wall-clock timings, kept apart from the deterministic metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTiming {
    pub round: u64,
    pub strategy: Strategy,
    pub device_ms: f64,
    pub aggregate_ms: f64,
    pub eval_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub strategy: Strategy,
    pub cloud: ModelPair,
    pub version: u64,
    pub metrics: Vec<RoundMetrics>,
    pub events: Vec<Event>,
    pub timing: Vec<RoundTiming>,
}

impl OnlineResult {
    /// Writes `metrics.jsonl`, `events.jsonl`, `timing.jsonl` and the final
    /// checkpoint into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(art::METRICS), &self.metrics)?;
        write_jsonl(&dir.join(art::EVENTS), &self.events)?;
        write_jsonl(&dir.join(art::TIMING), &self.timing)?;
        self.cloud.save(
            &dir.join(art::CHECKPOINT),
            serde_json::json!({ "version": self.version, "strategy": self.strategy }),
        )?;
        Ok(())
    }
}

/// Cumulative `(down, up)` bytes replayed from transfer events.
pub fn account_communication(events: &[Event]) -> (u64, u64) {
    events.iter().fold((0, 0), |(down, up), e| match e {
        Event::Transfer {
            direction: Direction::Down,
            bytes,
            ..
        } => (down + bytes, up),
        Event::Transfer {
            direction: Direction::Up,
            bytes,
            ..
        } => (down, up + bytes),
        _ => (down, up),
    })
}

fn json_len<T: Serialize>(v: &T) -> Result<u64> {
    Ok(serde_json::to_vec(v)?.len() as u64)
}

/// Bytes of a sub-model download: checkpoint plus spec message.
pub fn download_bytes(sub: &ModelPair, spec: &SubModelSpec) -> Result<u64> {
    Ok(sub.to_bytes()?.len() as u64 + json_len(spec)?)
}

/// Bytes of an update upload: trained checkpoint plus importance message.
pub fn upload_bytes(model: &ModelPair, importance: &ImportanceVector) -> Result<u64> {
    Ok(model.to_bytes()?.len() as u64 + json_len(importance)?)
}

/// Spec a device holds and the conditions it was derived under.
#[derive(Debug, Clone)]
struct Cached {
    spec: SubModelSpec,
    data_version: u64,
}

/// Per-device model kept by the local-only baseline.
#[derive(Debug, Clone)]
struct LocalState {
    cached: Cached,
    model: ModelPair,
}

struct DeviceInput<'a> {
    device: usize,
    data: &'a Dataset,
    data_version: u64,
    budget: ResourceBudget,
    cached: Option<Cached>,
    local: Option<LocalState>,
}

#[derive(Default)]
struct DeviceOutcome {
    events: Vec<Event>,
    update: Option<DeviceUpdate>,
    cached: Option<Cached>,
    local: Option<LocalState>,
    pre_accuracy: Option<f64>,
    post_accuracy: Option<f64>,
    trained: bool,
    skipped: bool,
}

struct RoundCtx<'a> {
    cfg: &'a ScenarioConfig,
    strategy: Strategy,
    round: u64,
    cloud: &'a ModelPair,
    version: u64,
    costs: Vec<Vec<ResourceCost>>,
    shared: ResourceCost,
}

impl RoundCtx<'_> {
    fn skip(&self, out: &mut DeviceOutcome, device: usize, e: &Error) {
        out.skipped = true;
        out.events.push(Event::Skip {
            round: self.round,
            device,
            class: e.class().to_string(),
            reason: e.to_string(),
        });
    }

    fn transfer(&self, out: &mut DeviceOutcome, device: usize, direction: Direction, payload: Payload, bytes: u64) {
        out.events.push(Event::Transfer {
            round: self.round,
            device,
            direction,
            payload,
            bytes,
        });
    }

    /// The device's spec for this round: the cached one while its data is
    /// unchanged and it fits the budget, a fresh derivation otherwise.
    /// `Ok(None)` means the device was skipped.
    fn spec_for(
        &self,
        input: &DeviceInput<'_>,
        importance: &ImportanceVector,
        out: &mut DeviceOutcome,
    ) -> Result<Option<(SubModelSpec, bool)>> {
        let reason = match &input.cached {
            None => DeriveReason::Initial,
            Some(c) if c.data_version != input.data_version => DeriveReason::DataShift,
            Some(c) => {
                if self.cloud.cost_of(&c.spec)?.fits_within(&input.budget) {
                    return Ok(Some((c.spec.clone(), false)));
                }
                DeriveReason::Budget
            }
        };
        match derive_submodel(importance, &self.costs, self.shared, &input.budget) {
            Ok(d) => {
                let spec = d.spec.with_provenance(input.device, self.round);
                out.events.push(Event::Derive {
                    round: self.round,
                    device: input.device,
                    reason,
                    spec: spec.clone(),
                    total_importance: d.total_importance,
                    exact: d.exact,
                    cost: d.cost,
                    budget: input.budget,
                });
                out.cached = Some(Cached {
                    spec: spec.clone(),
                    data_version: input.data_version,
                });
                Ok(Some((spec, true)))
            }
            Err(e @ Error::Infeasible { .. }) => {
                self.skip(out, input.device, &e);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn run_device(&self, input: DeviceInput<'_>) -> Result<DeviceOutcome> {
        let mut out = DeviceOutcome {
            cached: input.cached.clone(),
            ..DeviceOutcome::default()
        };
        let d = input.device;
        let data = input.data;
        let mut rng = stream(self.cfg.seed, "local", d as u64, self.round);
        match self.strategy {
            Strategy::Eclm => {
                let importance = importance_profile(&self.cloud.selector, &data.x)?;
                let Some((spec, _)) = self.spec_for(&input, &importance, &mut out)? else {
                    return Ok(out);
                };
                let mut sub = self.cloud.materialize(&spec)?;
                self.transfer(&mut out, d, Direction::Down, Payload::SubModel, download_bytes(&sub, &spec)?);
                match local_train(&mut sub, data, &self.cfg.local, &mut rng) {
                    Ok(rep) => {
                        out.pre_accuracy = Some(rep.pre_accuracy);
                        out.post_accuracy = Some(rep.post_accuracy);
                        out.trained = true;
                        self.transfer(&mut out, d, Direction::Up, Payload::Update, upload_bytes(&sub, &importance)?);
                        out.update = Some(DeviceUpdate {
                            device: d,
                            base_version: self.version,
                            spec,
                            model: sub,
                            importance,
                            sample_count: data.len(),
                        });
                    }
                    Err(e @ Error::Divergence { .. }) => self.skip(&mut out, d, &e),
                    Err(e) => return Err(e),
                }
            }
            Strategy::Fedavg => {
                let mut model = self.cloud.clone();
                let bytes = model.to_bytes()?.len() as u64;
                self.transfer(&mut out, d, Direction::Down, Payload::FullModel, bytes);
                match local_train(&mut model, data, &self.cfg.local, &mut rng) {
                    Ok(rep) => {
                        out.pre_accuracy = Some(rep.pre_accuracy);
                        out.post_accuracy = Some(rep.post_accuracy);
                        out.trained = true;
                        self.transfer(&mut out, d, Direction::Up, Payload::FullModel, model.to_bytes()?.len() as u64);
                        let widths = model.layer_widths();
                        out.update = Some(DeviceUpdate {
                            device: d,
                            base_version: self.version,
                            spec: SubModelSpec::full(&widths),
                            model,
                            importance: ImportanceVector::uniform(&widths),
                            sample_count: data.len(),
                        });
                    }
                    Err(e @ Error::Divergence { .. }) => self.skip(&mut out, d, &e),
                    Err(e) => return Err(e),
                }
            }
            Strategy::NoAdapt => {
                let importance = importance_profile(&self.cloud.selector, &data.x)?;
                let Some((spec, fresh)) = self.spec_for(&input, &importance, &mut out)? else {
                    return Ok(out);
                };
                let sub = self.cloud.materialize(&spec)?;
                if fresh {
                    self.transfer(&mut out, d, Direction::Down, Payload::SubModel, download_bytes(&sub, &spec)?);
                }
                let acc = sub.accuracy(&data.x, &data.labels)?;
                out.pre_accuracy = Some(acc);
                out.post_accuracy = Some(acc);
            }
            Strategy::LocalOnly => {
                let importance = importance_profile(&self.cloud.selector, &data.x)?;
                let input = DeviceInput {
                    cached: input.local.as_ref().map(|l| l.cached.clone()),
                    ..input
                };
                let Some((spec, fresh)) = self.spec_for(&input, &importance, &mut out)? else {
                    return Ok(out);
                };
                // The device keeps adapting its own copy; it only downloads
                // again when its budget forces a new structure.
                let mut model = match input.local {
                    Some(l) if !fresh || l.cached.spec.layers == spec.layers => l.model,
                    _ => {
                        let sub = self.cloud.materialize(&spec)?;
                        self.transfer(&mut out, d, Direction::Down, Payload::SubModel, download_bytes(&sub, &spec)?);
                        sub
                    }
                };
                match local_train(&mut model, data, &self.cfg.local, &mut rng) {
                    Ok(rep) => {
                        out.pre_accuracy = Some(rep.pre_accuracy);
                        out.post_accuracy = Some(rep.post_accuracy);
                        out.trained = true;
                        out.local = Some(LocalState {
                            cached: Cached {
                                spec,
                                data_version: input.data_version,
                            },
                            model,
                        });
                    }
                    Err(e @ Error::Divergence { .. }) => self.skip(&mut out, d, &e),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(out)
    }
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Runs `cfg.rounds` rounds of `strategy` starting from `cloud` at `version`.
pub fn run_online(
    cfg: &ScenarioConfig,
    data: &PreparedData,
    cloud: ModelPair,
    version: u64,
    strategy: Strategy,
) -> Result<OnlineResult> {
    cfg.validate()?;
    crate::env::validate_tiers(&cloud, &cfg.fleet.tiers)?;
    let mut env = Environment::new(cfg, data, &cloud.total_cost())?;
    let mut cloud = cloud;
    let mut version = version;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut events = Vec::new();
    let mut timing = Vec::with_capacity(cfg.rounds);
    let mut cache: HashMap<usize, Cached> = HashMap::new();
    let mut local: HashMap<usize, LocalState> = HashMap::new();
    let (mut cum_down, mut cum_up) = (0u64, 0u64);
    let mut eval = (usize::MAX, Dataset::empty(0, 0));
    let weighting = match strategy {
        Strategy::Fedavg => ModuleWeighting::SampleCount,
        _ => ModuleWeighting::Importance,
    };
    for round in 1..=cfg.rounds as u64 {
        let t0 = Instant::now();
        let renv = env.begin_round(round)?;
        for s in &renv.shifts {
            events.push(Event::Shift {
                round,
                shift: s.clone(),
            });
        }
        events.push(Event::Participation {
            round,
            devices: renv.participants.clone(),
        });

        let ctx = RoundCtx {
            cfg,
            strategy,
            round,
            cloud: &cloud,
            version,
            costs: cloud.module_costs(),
            shared: cloud.shared_cost(),
        };
        let inputs: Vec<DeviceInput<'_>> = renv
            .participants
            .iter()
            .zip(&renv.budgets)
            .map(|(&d, &budget)| DeviceInput {
                device: d,
                data: env.data(d),
                data_version: env.data_version[d],
                budget,
                cached: cache.get(&d).cloned(),
                local: local.remove(&d),
            })
            .collect();
        let outcomes: Vec<DeviceOutcome> = inputs
            .into_par_iter()
            .map(|input| ctx.run_device(input))
            .collect::<Result<Vec<_>>>()?;
        let t1 = Instant::now();

        let mut updates = Vec::new();
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        let (mut skipped, mut trained) = (0, 0);
        let mut round_events = Vec::new();
        for (o, &d) in outcomes.into_iter().zip(&renv.participants) {
            round_events.extend(o.events);
            if let Some(c) = o.cached {
                cache.insert(d, c);
            }
            if let Some(l) = o.local {
                local.insert(d, l);
            }
            pre.extend(o.pre_accuracy);
            post.extend(o.post_accuracy);
            skipped += usize::from(o.skipped);
            trained += usize::from(o.trained);
            updates.extend(o.update);
        }
        let (down, up) = account_communication(&round_events);
        events.extend(round_events);

        let mut divergence = None;
        if !updates.is_empty() {
            let (next, report) = aggregate_with(&cloud, version, &updates, weighting)?;
            cloud = next;
            version = report.version;
            divergence = Some(report.divergence.clone());
            events.push(Event::Aggregation { round, report });
        }
        let t2 = Instant::now();

        if eval.0 != env.shift_count {
            eval = (env.shift_count, data.eval_set(env.shift_count));
        }
        let global_accuracy = cloud.accuracy(&eval.1.x, &eval.1.labels)?;
        let loads = eval_loads(&cloud, &eval.1.x)?.routed;
        cum_down += down;
        cum_up += up;
        let (mean, std) = mean_std(&post);
        let div = divergence.unwrap_or_default();
        metrics.push(RoundMetrics {
            round,
            strategy,
            version,
            participants: renv.participants.len(),
            trained,
            skipped,
            global_accuracy,
            local_accuracy_pre: mean_std(&pre).0,
            local_accuracy_mean: mean,
            local_accuracy_std: std,
            bytes_down: down,
            bytes_up: up,
            cumulative_bytes_down: cum_down,
            cumulative_bytes_up: cum_up,
            divergence: div.overall,
            divergence_per_layer: div.per_layer,
            divergence_shared: div.shared,
            loads,
            shifts: renv.shifts.len(),
        });
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        timing.push(RoundTiming {
            round,
            strategy,
            device_ms: ms(t0, t1),
            aggregate_ms: ms(t1, t2),
            eval_ms: ms(t2, t3),
            total_ms: ms(t0, t3),
        });
    }
    Ok(OnlineResult {
        strategy,
        cloud,
        version,
        metrics,
        events,
        timing,
    })
}
